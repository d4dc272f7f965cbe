import sys

from subaudit.cli import main

sys.exit(main())
