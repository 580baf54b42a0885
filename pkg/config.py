class Config:
    LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

    LOG_FILE = None

    LOG_MAX_BYTES = 5_000_000

    LOG_BACKUP_COUNT = 3

    SEED = 0

    VOCAB_SIZE = 512

    NUM_LAYERS = 2
    N_HEAD = 4
    D_MODEL = 64
    DFF = 128
    DROPOUT = 0.1
    MAX_LEN = 128
    IMAGE_GRID = (7, 7, 16)
    IMAGE_POSITIONAL_ENCODING = True

    LEARNING_RATE = 1e-3
    BATCH_SIZE = 16
    EPOCHS = 20
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    CLIP_NORM = 1.0
    SELECT_BEST = False


class DeskConfig(Config):
    """Laptop-sized default used by the CLI."""
    EPOCHS = 30


class FullConfig(Config):
    NUM_LAYERS = 6
    N_HEAD = 8
    D_MODEL = 512
    DFF = 2048
    DROPOUT = 0.2
    IMAGE_GRID = (7, 7, 1024)

    LEARNING_RATE = 1e-4
    BATCH_SIZE = 16
    EPOCHS = 20
    CLIP_NORM = None


class TestingConfig(Config):
    __test__ = False

    NUM_LAYERS = 1
    N_HEAD = 2
    D_MODEL = 8
    DFF = 16
    DROPOUT = 0.0
    VOCAB_SIZE = 11
    MAX_LEN = 16
    IMAGE_GRID = (2, 2, 3)

    LEARNING_RATE = 1e-2
    BATCH_SIZE = 4
    EPOCHS = 5


PRESETS = {
    "desk": DeskConfig,
    "full": FullConfig,
    "testing": TestingConfig,
}
