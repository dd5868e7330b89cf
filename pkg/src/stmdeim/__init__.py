"""Space-time reduced basis methods with MDEIM hyper-reduction."""

__version__ = "0.1.0"
