"""deskcaf: desk-scale pilot-job workload management.

Users submit multi-section jobs to a portal; a glidekeeper provisions
pilots onto simulated grid sites; a negotiator matches sections to
advertised slots; software moves through deterministic archives or a
fetch-on-demand namespace behind caching proxies; a CLI and web dashboard
monitor and kill live work.
"""

__version__ = "0.1.0"
