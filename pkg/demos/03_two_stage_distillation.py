"""One client's two training stages, in isolation: first the local model
distills from a (here: fixed) global generator while fitting its data,
then the local generator distills from the frozen local model.

Run:  python demos/03_two_stage_distillation.py
"""

from fedmdcg import autograd as ag
from fedmdcg.autograd import Tensor
from fedmdcg.data import make_blobs
from fedmdcg.losses import (diversity_loss, distill_from_global_losses,
                            distill_to_generator_losses,
                            generator_update_objective,
                            model_update_objective)
from fedmdcg.models import ModelSpec, ClientModel, init_classifier, init_extractor, init_generator
from fedmdcg.optim import AdamState, adam_step, sgd_step
from fedmdcg.rng import RngStream

train = make_blobs(classes=4, dim=8, per_class=150, separation=5.0, seed=0)
spec = ModelSpec("mlp", train.sample_shape, 4, noise_dim=32, generator_hidden=64)
model = ClientModel(init_extractor(spec, RngStream("demo/ext", 0)),
                    init_classifier(spec, RngStream("demo/clf", 0)))
global_gen = init_generator(spec, RngStream("demo/global-gen", 0))
local_gen = init_generator(spec, RngStream("demo/local-gen", 0))
rng = RngStream("demo/batches", 0)

print("== stage 1: local model update ==")
print("objective: CE on real data + distillation pulls toward the global")
print("generator at the latent level (mse) and the logit level (kl)\n")
for step in range(60):
    idx = rng.choice(len(train), 32)
    x, y = Tensor(train.images[idx]), train.labels[idx]
    z = Tensor(rng.normal((32, spec.noise_dim)))
    l_ce, l_mse, l_kl = distill_from_global_losses(spec, model, global_gen, x, y, z)
    total = model_update_objective(l_ce, None, l_mse, l_kl, 0.0, 0.25, 0.25)
    model.extractor.zero_grad()
    model.classifier.zero_grad()
    total.backward()
    sgd_step(model.extractor, model.extractor.grads(), 0.05)
    sgd_step(model.classifier, model.classifier.grads(), 0.05)
    if step % 15 == 0:
        print(f"  step {step:3d}: ce={l_ce.item():.3f} "
              f"latent-mse={l_mse.item():.3f} logit-kl={l_kl.item():.4f}")

print("\n== stage 2: local generator update (model now frozen) ==")
print("objective: kl + mse toward the model's latents, CE for fidelity,")
print("and a diversity penalty so outputs do not collapse per class\n")
opt = AdamState()
for step in range(120):
    idx = rng.choice(len(train), 32)
    x, y = Tensor(train.images[idx]), train.labels[idx]
    z = Tensor(rng.normal((32, spec.noise_dim)))
    l_mse, l_kl, l_ce, g_out = distill_to_generator_losses(spec, model,
                                                           local_gen, x, y, z)
    l_div = diversity_loss(2, z, ag.one_hot(y, 4), g_out)
    total = generator_update_objective(l_kl, l_mse, l_ce, l_div, 1.0, 1.0, 1.0)
    local_gen.zero_grad()
    total.backward()
    adam_step(local_gen, local_gen.grads(), opt, 1e-3)
    if step % 30 == 0:
        print(f"  step {step:3d}: kl={l_kl.item():.4f} mse={l_mse.item():.3f} "
              f"ce={l_ce.item():.3f} div={l_div.item():.4f}")

print("\n== consistency check ==")
print("feed the generator's outputs to the classifier it was trained for:")
with ag.no_grad():
    from fedmdcg.models import classifier_forward, generator_forward
    z = Tensor(rng.normal((400, spec.noise_dim)))
    y = rng.choice(4, 400)
    out = generator_forward(spec, local_gen, z, ag.one_hot(y, 4), train=False)
    preds = classifier_forward(spec, model.classifier, out).data.argmax(1)
print(f"classifier agrees with the conditioning label on "
      f"{(preds == y).mean():.1%} of generated samples")
