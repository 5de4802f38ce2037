import sys

from audiomorph.cli import main

sys.exit(main())
