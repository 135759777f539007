# Models package initialization
