"""Endpoint agent: provisioning, scheduling, watchdog, and elasticity."""
