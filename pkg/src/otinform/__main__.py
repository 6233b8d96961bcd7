import sys

from otinform.cli import main

sys.exit(main())
