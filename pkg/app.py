import sys

from add_curriculum.cli import main

if __name__ == "__main__":
    sys.exit(main())
