import sys

from dcp.cli import main

sys.exit(main())
