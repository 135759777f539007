# dMRI data package initialization
