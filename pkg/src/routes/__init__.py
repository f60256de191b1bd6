# Routes package initialization 