"""Benchmark harness: provisions a local fabric, drives experiment plans,
injects faults, and emits CSV reports."""
