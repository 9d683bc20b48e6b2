from . import caption_commands, check_commands, data_commands, train_commands

COMMAND_MODULES = (data_commands, train_commands, caption_commands, check_commands)
