"""Command-line surface: configuration, commands and report files."""
