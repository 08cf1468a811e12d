"""Cooperative game-theoretic assistance with a learned intent predictor.

Physical human-robot interaction along a shared trajectory: an impedance
plant driven jointly by the human and an assistive controller derived from a
cooperative linear-quadratic game, with a recurrent network predicting the
human's short-horizon intent from the interaction history.  Includes the
full offline pipeline (episode simulation, iterative retraining, transfer
learning between contexts), evaluation metrics, a CLI and a live websocket
service.
"""

from .config import RunConfig, from_profile, load_config
from .control import (CareError, GameController, GameWeights, SingularBlendError,
                      build_game_controller, combine_costs, evaluate_game_cost,
                      feedback_gain, reference_from_prediction, robot_action,
                      shared_reference, solve_care)
from .dynamics import (GAME, IMPEDANCE, MANUAL_GUIDANCE, TRAJECTORY_KINDS,
                       Episode, EpisodeMeta, HumanModel, Obstacle, PlantParams,
                       PlantStepper, SimulationBlowup, StepEngine,
                       TrajectorySpec, build_state_space, discretize,
                       human_force, human_intent, nominal_position,
                       nominal_velocity, place_obstacle, random_obstacle,
                       simulate_episode)
from .episodes import (FormatError, episode_to_csv, load_dataset, load_episode,
                       save_dataset, save_episode)
from .metrics import (ComparisonResult, WelchResult, compare_controllers, e_max,
                      e_rms, f_rms, impedance_variant, welch_t_test)
from .pipeline import (Dataset, IterateResult, TransferResult, collect_episodes,
                       fit_normalization, iterate, make_windows, train_model,
                       transfer_learn)
from .predictor import (ModelFormatError, Normalization, NonFiniteLossError,
                        PredictorConfig, PredictorModel, init_model, load_model,
                        loss_and_gradients, save_model)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
