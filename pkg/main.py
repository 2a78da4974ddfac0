import sys

from boomlab.cli import main

if __name__ == "__main__":
    sys.exit(main())
