"""Process-wide settings for the shapereg command line."""
