#!/usr/bin/env python3
"""
PPT simulator entry point.

    python app.py run scenarios/baseline.yaml
    python app.py verify-oracle scenarios/smoke.yaml
"""

from pptfl.cli import cli

if __name__ == '__main__':
    cli()
