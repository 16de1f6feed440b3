import sys

from bros.cli import main

sys.exit(main())
