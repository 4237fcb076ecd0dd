# D.I.S.C.O. Tests
