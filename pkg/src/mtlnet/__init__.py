"""mtlnet: a shared-encoder network for joint road segmentation and object
detection, built on a small numpy autodiff engine.

Modules: tensor (autodiff and conv ops), model, loss, postproc, metrics,
fisheye, data, train, bench, gradcheck and cli.
"""

__version__ = "0.1.0"
