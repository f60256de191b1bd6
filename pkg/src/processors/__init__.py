# Processors package initialization 