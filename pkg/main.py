"""
GeoWalk - Main Application Entry Point
Geometry prompts and geometry-aware adapters for a desk-scale host transformer
"""

import sys

import torch

from geowalk.core.commands import CommandApp
from geowalk.core.config import NUM_THREADS
from geowalk.routers import check, experiments, pipeline

# Create the command application
app = CommandApp(
    prog="geowalk",
    description="Riemannian geometry prompts, geometry mixture-of-experts adapters and their two-stage training",
)

# Include routers
app.include_router(pipeline.router)
app.include_router(experiments.router)
app.include_router(check.router)


def main(argv=None) -> int:
    torch.set_num_threads(NUM_THREADS)
    return app.run(argv)


if __name__ == "__main__":
    sys.exit(main())
