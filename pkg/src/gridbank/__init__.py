"""GridBank: accounting and micropayments for compute-grid economies."""
