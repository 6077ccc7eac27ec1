"""Privacy negotiation for IoT deployments: policy model, utility scoring,
individual and group negotiation, wire transport and a filtered data
pipeline."""

__version__ = "0.1.0"
