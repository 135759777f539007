# Tracking package initialization
