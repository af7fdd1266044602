from ckp.cli import main

raise SystemExit(main())
