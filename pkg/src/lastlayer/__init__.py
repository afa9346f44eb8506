"""Neural network training with a closed-form last layer.

The backbone is an MLP trained by (stochastic) gradient descent; the linear
last layer is kept optimal in closed form, either as a full-batch ridge
solution or as a minibatch proximal solution anchored to the previous
weights. The theory module numerically verifies the properties the method
rests on: envelope-style gradient equivalence, the Kalman/MAP reading of the
proximal update, the critical-point structure of the induced loss, and
convergence of the associated kernel gradient flow.
"""

__version__ = "0.1.0"

from .backbone import MlpBackbone, backward, forward, init_backbone
from .datasets import gen_classification_task, gen_regression_task
from .dfiv import DfivConfig, dfiv_evaluate, dfiv_train, generate_iv_data
from .head import (HeadState, augment_features, init_head, predict,
                   predict_class, proximal_solution, ridge_solution)
from .losses import (LossReport, batch_loss, induced_loss, induced_proximal_loss,
                     proximal_loss, ridge_loss)
from .optim import TrainConfig, adam_step, train
from .records import RunRecord
from .theory import (FlowState, check_envelope_gradient, check_kalman_equivalence,
                     decompose_targets, functional_gradient, integrate_flow,
                     is_critical)
