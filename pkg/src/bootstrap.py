#!/usr/bin/env python3
"""
Auto-bootstrapping entry point: checks the environment, then runs the command line
"""

import sys
from pathlib import Path

# Add src directory to path
src_dir = Path(__file__).parent
sys.path.insert(0, str(src_dir))

REQUIRED = {
    "numpy": "numpy",
    "scipy": "scipy",
    "torch": "torch",
    "rich": "rich",
}


def check_python_version():
    if sys.version_info < (3, 9):
        print("Error: Python 3.9 or higher is required", file=sys.stderr)
        print(f"Current version: {sys.version}", file=sys.stderr)
        sys.exit(1)


def missing_dependencies():
    missing = []
    for module, package in REQUIRED.items():
        try:
            __import__(module)
        except ImportError:
            missing.append(package)
    return missing


def check_dependencies():
    missing = missing_dependencies()
    if missing:
        print(f"[!] Missing dependencies: {', '.join(missing)}", file=sys.stderr)
        print("Install them with:", file=sys.stderr)
        print(f"  {sys.executable} -m pip install -r requirements.txt", file=sys.stderr)
        sys.exit(1)


def initialize_directories():
    base_dir = Path(__file__).parent.parent
    for dir_name in ('logs', 'monitoring', 'checkpoints', 'config', 'runs'):
        (base_dir / dir_name).mkdir(exist_ok=True)


def main(argv=None):
    check_python_version()
    check_dependencies()
    initialize_directories()

    from scan_planner import main as planner_main
    sys.exit(planner_main(argv))


if __name__ == "__main__":
    main()
