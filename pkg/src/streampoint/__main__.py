import sys

from streampoint.cli import main

sys.exit(main())
