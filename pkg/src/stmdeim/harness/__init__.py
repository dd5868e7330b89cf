"""Configuration, pipelines and command line."""
from .config import ConfigError, RunConfig, load_config, sample_disjoint, sample_parameters
from .pipeline import CSV_COLUMNS, PipelineError, read_report, run_fom, run_offline, run_online, summarize

__all__ = ["ConfigError", "RunConfig", "load_config", "sample_disjoint", "sample_parameters", "CSV_COLUMNS",
           "PipelineError", "read_report", "run_fom", "run_offline", "run_online", "summarize"]
