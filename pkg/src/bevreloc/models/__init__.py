from .localizer import LocalizationModel, ModelConfig, load_checkpoint, save_checkpoint  # noqa: F401
from .registration import NeuralLocalizer, RegistrationConfig  # noqa: F401
