# Router utilities package
