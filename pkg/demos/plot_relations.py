"""
Soft relations from coarse labels
=================================

Build the three kinds of target rows for one query against a small bank and
watch the masked rows move between the supervised and nearest-neighbour
extremes as the temperature changes.
"""

import numpy as np

from maskcon.bank import BankSnapshot
from maskcon.relations import INFINITY, ZERO, relations_mask, relations_self, relations_sup

# A key projection and a bank of five unit vectors on the circle.
angles = np.array([0.1, 0.5, 1.2, 2.0, 0.05])
bank = BankSnapshot(
    projections=np.stack([np.cos(angles), np.sin(angles)], axis=1),
    labels=np.array([0, 0, 0, 1, 1]),
    ids=np.arange(5),
)
key = np.array([[1.0, 0.0]])
np.set_printoptions(precision=4, suppress=True)

# Column 0 is the key view of the query itself; columns 1.. follow the bank.
print("self:", relations_self(1, len(bank)).rows[0])
print("sup: ", relations_sup([0], bank.labels).rows[0])

# Entries from the other coarse class stay at zero for every temperature.
# The nearest same-class entry always gets weight 1.
for tau in (ZERO, 0.05, 0.2, 1.0, INFINITY):
    print(f"mask tau={tau:<5}", relations_mask(key, bank, [0], tau).rows[0])
