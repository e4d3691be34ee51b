"""Fair survival analysis through chi-square distributionally robust optimization."""

from .data import (CsvSchema, SurvivalDataset, TimeGrid, event_time_grid, load_csv,
                   make_two_group_mixture, stratified_split)
from .dro import (DroConfig, c_alpha, dro_grad_theta, dro_value, solve_eta, train_dro,
                  train_exact_dro_cox, train_split_dro)
from .losses import DeepHitConfig, LossSpec, point_losses
from .train import TrainConfig, TrainingError, train_erm, train_regularized, tune

__version__ = "0.1.0"
