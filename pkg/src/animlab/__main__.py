import sys

from animlab.cli import main

sys.exit(main())
