import sys

from knowflow.cli import main

sys.exit(main())
