from fedsb.cli import main
import sys

sys.exit(main())
