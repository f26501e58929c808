from covilearn.cli import main

raise SystemExit(main())
