import sys

from hyperkbcs.cli import main

sys.exit(main())
