#!/usr/bin/env python3
"""
LIDAR-EPW Launcher
==================

Runs the command line tools without installing the package:

    python main.py gen-data --frames 50 --out data --seed 1
    python main.py fit-lut --in data

Author: LIDAR-EPW Team
"""

from lidar_epw.cli import main

if __name__ == "__main__":
    main()
