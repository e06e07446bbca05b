# Gradus QR v1.0 - Core Module
