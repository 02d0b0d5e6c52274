import sys

from descdet.cli import main

sys.exit(main())
