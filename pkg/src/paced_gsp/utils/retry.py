import logging
from functools import wraps

logger = logging.getLogger(__name__)


def retry_on_nonconvergence(max_retries: int = 2, backoff: float = 0.5):
    """
    Re-run a pacing solve with heavier damping while it fails to converge.

    The wrapped callable must accept a ``damping`` keyword and return an
    object with a ``converged`` attribute. Each retry multiplies the damping
    by ``backoff``. The last result is returned whether or not it converged;
    callers decide what a non-converged solve means for them.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, damping: float = 0.5, **kwargs):
            current_damping = damping
            result = func(*args, damping=current_damping, **kwargs)
            retries = 0

            while not result.converged and retries < max_retries:
                retries += 1
                current_damping *= backoff
                logger.warning(
                    f"Attempt {retries} did not converge "
                    f"(residual {result.residual_inf_norm:.3e}). "
                    f"Retrying with damping {current_damping:g}..."
                )
                result = func(*args, damping=current_damping, **kwargs)

            if not result.converged:
                logger.error(f"Failed to converge after {max_retries} retries")
            return result

        return wrapper
    return decorator
