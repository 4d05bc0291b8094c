"""Rover path planning with a learned proxy collision heuristic."""
