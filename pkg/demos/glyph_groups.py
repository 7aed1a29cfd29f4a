"""Character groups on the built-in glyph fallback, at toy scale.

Six clients each hold one writing style: digits, uppercase or lowercase.
A CNN that reads each client's leading principal loading next to the
image features separates the groups; the same CNN fed a zero vector has
to serve one compromise classifier to everyone.

Run:  python3 demos/glyph_groups.py        (about a minute)
"""

import time

import numpy as np

from fedstat import emnist as em
from fedstat.federation import FederationConfig, run
from fedstat.stats import client_stats, DummyZeros
from fedstat.synthdata import derive_stream


def main():
    t0 = time.time()
    images, labels = em.make_fallback_pool(per_class=45, size=14, seed=7)
    rng = derive_stream(7, [em._PARTITION_LABEL])
    clients = em.partition_clients(images, labels, clients_per_group=2,
                                   points_per_client=120, rng=rng,
                                   test_per_client=30)
    print(f"pool of {images.shape[0]} rendered glyphs, "
          f"{len(clients)} clients ({time.time() - t0:.1f}s)\n")

    # Group identity is visible in the leading loading alone: loadings of
    # same-group clients align, different groups do not.
    mus = [em.client_pcs(c, 1).mu for c in clients]
    print("cosine of leading loadings between clients:")
    for i, a in enumerate(mus):
        row = " ".join(f"{abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)):5.2f}"
                       for b in mus)
        print(f"  client {i} ({clients[i].group:>9}): {row}")

    cfg = FederationConfig(task="emnist", model="cnn", clusters=3,
                           peers_per_cluster=2, n_per_client=120,
                           features=196, rounds=4, local_epochs=6,
                           batch_size=40, lr=0.01, wd=0.001, seed=7)
    width = clients[0].images.shape[1] + 62

    for label, stats in (("conditional (own loading)",
                          {c.client_id: em.client_pcs(c, 1) for c in clients}),
                         ("unconditional (zero vector)",
                          {c.client_id: client_stats(c, DummyZeros(width))
                           for c in clients})):
        for c in clients:
            c.stats = stats[c.client_id]
        t0 = time.time()
        res = run(cfg, shards=clients, adapter=em.CnnAdapter())
        print(f"\n{label}: accuracy {res.final_report.global_mean:.3f} "
              f"({time.time() - t0:.0f}s)")
        for cid, group, acc in zip(res.final_report.client_ids,
                                   [c.group for c in clients],
                                   res.final_report.per_client_metric):
            print(f"    client {cid} ({group:>9}): {acc:.3f}")


if __name__ == "__main__":
    main()
