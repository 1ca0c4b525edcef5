import sys

from lesionforge.cli import main

sys.exit(main())
