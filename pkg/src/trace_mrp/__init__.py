"""Digital-trace opinion estimates: tweet-to-user aggregation, MRP and survey validation."""

__version__ = "0.1.0"
