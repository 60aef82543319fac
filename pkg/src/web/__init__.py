"""Read-only dashboard over ressl run directories."""
