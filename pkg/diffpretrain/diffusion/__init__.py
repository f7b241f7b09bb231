from diffpretrain.diffusion.schedule import NoiseSchedule, make_schedule, scaled_beta_range, schedule_from_config
from diffpretrain.diffusion.process import (
    q_sample, ddpm_loss, p_step, sample, predict_x0, predict_noise, sample_timesteps
)
