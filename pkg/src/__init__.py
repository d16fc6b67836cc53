"""AD-YOLO SELD toolkit package."""
