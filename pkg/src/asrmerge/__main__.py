import sys

from asrmerge.cli import main

sys.exit(main())
