import sys

from mma.cli import main

sys.exit(main())
