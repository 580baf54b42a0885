from reportgen.cli.commands.data import synth, tokenize
from reportgen.cli.commands.model import attention, generate, train
from reportgen.cli.commands.evaluate import evaluate
