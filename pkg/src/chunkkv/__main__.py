import sys

from chunkkv.cli import main

sys.exit(main())
