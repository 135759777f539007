# Processing package initialization 