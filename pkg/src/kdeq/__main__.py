import sys

from kdeq.cli import main

sys.exit(main())
