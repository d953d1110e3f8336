import ordinalrd.cli

if __name__ == "__main__":
    ordinalrd.cli.main()
