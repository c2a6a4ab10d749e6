import sys

from SST.cli import main

sys.exit(main())
