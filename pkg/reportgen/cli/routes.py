from reportgen.cli.commands import attention, evaluate, generate, synth, tokenize, train


def register_commands(group):
    """Register all pipeline subcommands"""
    group.add_command(synth)
    group.add_command(tokenize)

    group.add_command(train)
    group.add_command(generate)
    group.add_command(attention)

    group.add_command(evaluate)
