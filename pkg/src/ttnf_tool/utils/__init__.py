"""Utils package."""
