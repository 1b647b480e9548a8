"""Synthetic underwater world and sensor simulator."""
