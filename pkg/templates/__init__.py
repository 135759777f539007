# Templates package initialization 