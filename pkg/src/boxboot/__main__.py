from boxboot.cli import main

raise SystemExit(main())
