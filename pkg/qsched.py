#!/usr/bin/env python3
"""Launcher for qsched"""

import sys
from qsched import runner

if __name__ == '__main__':
    sys.exit(runner.main())
