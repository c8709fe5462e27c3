from vflkit.cli import main

main()
