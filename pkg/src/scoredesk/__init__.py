"""scoredesk: diffusion distillation objectives on tractable mixture priors."""

from .schedule import NoiseSchedule, TimeWeighting, sample_t
from .prior import GaussianMixture, PromptBank, diffused_stats, isotropic_stats
from .generator import (GeneratorState, ViewTransform, render, perturb,
                        diffused_particle_mixture, empirical_noisy_score,
                        particle_noisy_stats)
from .fake_score import DsmConfig, DsmTrainer, ScoreNet, grad_check
from .reward import (RewardModel, er_log_density, reward_score_jacobian,
                     reward_score_xt)
from .objectives import (DrawBatch, MixtureField, ObjectiveSpec, RewardField,
                         StepSample, assemble_theta_grad,
                         combined_divergence_on_batch, divergence_estimate,
                         divergence_on_batch, grad_cdp, grad_er_kl,
                         grad_kl_unified, grad_sds, grad_sim_total, grad_udp,
                         kl_cotangents_batch, make_step_sample,
                         sample_draw_batch, score_projection_check,
                         sim_cotangents_batch, sim_surrogate)

from .engine import (EngineAbort, RunReport, RunSetup, TrainConfig,
                     coverage_entropy, init_generator, mode_coverage,
                     run_experiment, run_step)
from .frames import render_frame

__version__ = "0.1.0"
