# Utilities package initialization 