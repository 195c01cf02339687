import sys

from gfkd.cli import main

sys.exit(main())
