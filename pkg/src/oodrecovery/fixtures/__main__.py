from . import available, record

for name in available():
    print(record(name))
