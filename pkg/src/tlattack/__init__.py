"""Target-agnostic brute-force attack on transfer-learned Softmax classifiers."""
