# Data Processing Module
