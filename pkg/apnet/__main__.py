import sys

from apnet.cli import main

if __name__ == "__main__":
    sys.exit(main())
