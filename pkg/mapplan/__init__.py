"""Map-predictive motion planning for a vehicle exploring unknown mazes."""
