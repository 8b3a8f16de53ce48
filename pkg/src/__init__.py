# LSE toolkit package
