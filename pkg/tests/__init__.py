# Test package for the AD-YOLO SELD toolkit
