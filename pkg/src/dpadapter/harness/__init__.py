"""Config-driven experiment runner, checkpoints and plot data."""
