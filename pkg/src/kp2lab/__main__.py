import sys

from kp2lab.cli import main

sys.exit(main())
