"""Critic network, update rules and training loops."""

from .critic import (
    CriticArch,
    CriticParams,
    copy_critic,
    critic_backward,
    critic_forward,
    critic_forward_tasks,
    init_critic,
    load_critic,
    save_critic,
)
from .trainer import (
    METHODS,
    RLResult,
    RunOutcome,
    Splits,
    TargetPair,
    WeightAudit,
    evaluate,
    fit_critic,
    predict_dataset,
    prepare_splits,
    pretrain_actor,
    pretrained_model,
    rng_streams,
    run_methods,
    train_dple,
    train_rl,
    train_rmtl,
    transfer_run,
)
from .updates import (
    WeightSchedule,
    actor_policy_update,
    compute_weights,
    critic_update,
    policy_objective,
    soft_update,
    td_error_batch,
    td_target,
    td_targets,
    weighted_loss,
)
