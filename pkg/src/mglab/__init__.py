"""Self-supervised mobile-grasping learner on a 2D top-down grasp simulator."""

__version__ = "0.1.0"
