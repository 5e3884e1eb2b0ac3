from anglekit.main import main

main()
